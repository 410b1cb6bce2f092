use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gengrade_core::dataset::{
    dedup_stats, partition_zipf, read_dataset, read_dataset_for, read_gold, read_solutions, Dataset, GoldRecord,
};
use gengrade_core::eval::{exact_rate, feedback_metrics, knn_predictions, nap_predictions};
use gengrade_core::feedback::{diagnose_misparses, feedback};
use gengrade_core::knn::KnnIndex;
use gengrade_core::nap::{build_model, load_model, parse, save_model, train, DecodeMode, InferenceModel, ModelConfig};
use gengrade_core::sampling::{
    good_turing_curve, sample_dataset, text_frequencies, uniqueness_curve, window_mean_prob, zipf_fit, SamplerPolicy,
};
use gengrade_core::simulator::{load_simulator_file, validate, Simulator};
use gengrade_core::Exec;
use gengrade_service::{Assistant, Config, Service, SystemClock};
use serde::Serialize;
use serde_json::json;

use crate::{Command, DatasetCommand, Failure, Mode, Policy};

type Res<T = ()> = Result<T, Failure>;

fn data(e: impl Display) -> Failure {
    Failure::Data(e.to_string())
}

fn internal(e: impl Display) -> Failure {
    Failure::Internal(e.to_string())
}

fn grammar(path: &Path) -> Res<Simulator> {
    load_simulator_file(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn dataset(path: &Path) -> Res<Dataset> {
    read_dataset(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn model(path: &Path, sim: &Simulator) -> Res<InferenceModel> {
    let m = load_model(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    m.check_grammar(sim).map_err(data)?;
    Ok(m)
}

fn solutions(path: &Path) -> Res<Vec<String>> {
    read_solutions(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn sink(out: &Option<PathBuf>) -> Res<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_lines<T: Serialize>(out: &Option<PathBuf>, rows: impl IntoIterator<Item = T>) -> Res {
    let mut w = sink(out)?;
    for r in rows {
        serde_json::to_writer(&mut w, &r).map_err(internal)?;
        w.write_all(b"\n").map_err(internal)?;
    }
    w.flush().map_err(internal)
}

fn print_json(v: &impl Serialize) -> Res {
    println!("{}", serde_json::to_string_pretty(v).map_err(internal)?);
    Ok(())
}

pub fn run(cmd: Command, seed: u64, exec: Exec) -> Res {
    match cmd {
        Command::Sample(a) => {
            let sim = grammar(&a.grammar)?;
            let policy = match a.policy {
                Policy::Iid => SamplerPolicy::Iid,
                Policy::Uniform => SamplerPolicy::Uniform,
                Policy::Adaptive => SamplerPolicy::Adaptive { r: a.r, d: a.d },
            };
            let ds = sample_dataset(&sim, policy, a.n, seed, exec).map_err(data)?;
            let mut w = sink(&a.out)?;
            ds.write_to(&mut w).map_err(internal)?;
            w.flush().map_err(internal)
        }
        Command::Analyze(a) => analyze(a),
        Command::Dataset(DatasetCommand::Stats { dataset: p }) => {
            let ds = dataset(&p)?;
            let stats = dedup_stats(&ds).map_err(data)?;
            print_json(&json!({
                "records": ds.len(),
                "grammar_hash": ds.grammar_hash,
                "distinct": stats.distinct,
                "max_frequency": stats.max_frequency,
                "singletons": stats.singletons,
            }))
        }
        Command::Dataset(DatasetCommand::Partition { dataset: p, k }) => {
            let ds = dataset(&p)?;
            print_json(&partition_zipf(&text_frequencies(&ds), k))
        }
        Command::Train(a) => {
            let sim = grammar(&a.grammar)?;
            let (ds, _) = read_dataset_for(&a.dataset, &sim).map_err(data)?;
            let cfg = ModelConfig {
                hidden: a.hidden,
                embed: a.embed,
                encoder_layers: a.layers,
                batch_size: a.batch,
                epochs: a.epochs,
                lr: a.lr,
                weight_decay: a.wd,
                seed,
            };
            let mut m = build_model(&sim, &ds, &cfg).map_err(data)?;
            let report = train(&mut m, &sim, &ds, exec).map_err(internal)?;
            save_model(&m, &a.out).map_err(internal)?;
            print_json(&json!({ "epoch_loss": report.epoch_loss, "parameters": m.params.len() }))
        }
        Command::Parse(a) => {
            let sim = grammar(&a.io.grammar)?;
            let m = model(&a.io.model, &sim)?;
            let mode = match a.mode {
                Mode::Greedy => DecodeMode::Greedy,
                Mode::Beam => DecodeMode::Beam { width: a.beam_width },
                Mode::Sample => DecodeMode::Sample { seed },
            };
            let ys = solutions(&a.io.input)?;
            let rows = exec.map(&ys, |y| {
                parse(&m, &sim, y, mode).map(|r| {
                    json!({
                        "text": y,
                        "trace": r.trace,
                        "exact": r.exact,
                        "total_log_prob": r.total_log_prob,
                        "neighbour": r.production.text,
                    })
                })
            });
            let rows: Vec<_> = rows.into_iter().collect::<Result<_, _>>().map_err(data)?;
            write_lines(&a.io.out, rows)
        }
        Command::Knn(a) => {
            let ds = dataset(&a.dataset)?;
            let index = KnnIndex::new(&ds).map_err(data)?;
            let mut rows = Vec::new();
            for y in solutions(&a.input)? {
                let neighbours = index.query(&y, a.k, exec).map_err(data)?;
                rows.push(json!({ "text": y, "neighbours": neighbours }));
            }
            write_lines(&a.out, rows)
        }
        Command::Feedback(a) => {
            let sim = grammar(&a.grammar)?;
            let m = model(&a.model, &sim)?;
            let ys = solutions(&a.input)?;
            let rows: Vec<_> = exec
                .map(&ys, |y| feedback(&m, &sim, y))
                .into_iter()
                .collect::<Result<_, _>>()
                .map_err(data)?;
            write_lines(&a.out, rows)
        }
        Command::Diagnose(a) => {
            let sim = grammar(&a.grammar)?;
            let m = model(&a.model, &sim)?;
            let scores = diagnose_misparses(&m, &sim, &solutions(&a.input)?, exec).map_err(data)?;
            let mut w = sink(&a.out)?;
            let width = scores.iter().map(|s| s.node.len()).max().unwrap_or(4).max(4);
            writeln!(w, "{:<width$}  {:>6}  {:>10}  {:>13}", "node", "score", "mismatches", "opportunities").map_err(internal)?;
            for s in &scores {
                writeln!(w, "{:<width$}  {:>6.3}  {:>10}  {:>13}", s.node, s.score, s.mismatches, s.opportunities)
                    .map_err(internal)?;
            }
            w.flush().map_err(internal)
        }
        Command::Eval(a) => eval(a, exec),
        Command::Serve(a) => serve(a),
        Command::Validate(a) => {
            let sim = grammar(&a.grammar)?;
            let report = validate(&sim);
            print_json(&report)?;
            if report.is_clean() {
                Ok(())
            } else {
                Err(data(format!("{} issue(s) found", report.issues.len())))
            }
        }
    }
}

fn analyze(a: crate::AnalyzeArgs) -> Res {
    let ds = dataset(&a.dataset)?;
    let unique = uniqueness_curve(&ds).map_err(data)?;
    let gt = good_turing_curve(&ds).map_err(data)?;
    let mut freqs: Vec<u64> = text_frequencies(&ds).into_iter().map(|(_, f)| f).collect();
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    let fit = zipf_fit(&freqs.iter().map(|&f| f as f64).collect::<Vec<_>>()).ok();
    let windows = match &a.grammar {
        Some(g) => Some(window_mean_prob(&grammar(g)?, &ds, a.window).map_err(data)?),
        None => None,
    };
    if let Some(path) = &a.curves {
        let mut w = sink(&Some(path.clone()))?;
        writeln!(w, "series,x,y").map_err(internal)?;
        let mut row = |s: &str, x: usize, y: f64| writeln!(w, "{s},{x},{y}").map_err(internal);
        for &(n, d) in &unique {
            row("uniqueness", n, d as f64)?;
        }
        for &(n, p) in &gt {
            row("good_turing", n, p)?;
        }
        for (i, &f) in freqs.iter().enumerate() {
            row("zipf", i + 1, f as f64)?;
        }
        for (i, &m) in windows.iter().flatten().enumerate() {
            row("window_mean_prob", i, m)?;
        }
        drop(row);
        w.flush().map_err(internal)?;
    }
    let stats = dedup_stats(&ds).map_err(data)?;
    print_json(&json!({
        "records": ds.len(),
        "distinct": stats.distinct,
        "singletons": stats.singletons,
        "good_turing": gt.last().map(|g| g.1),
        "zipf": fit,
        "window_mean_prob": windows,
    }))
}

fn eval(a: crate::EvalArgs, exec: Exec) -> Res {
    let sim = grammar(&a.grammar)?;
    let m = model(&a.model, &sim)?;
    let gold: Vec<GoldRecord> = read_gold(&a.gold).map_err(|e| data(format!("{}: {e}", a.gold.display())))?;
    let texts: Vec<&str> = gold.iter().map(|g| g.text.as_str()).collect();
    let golds: Vec<Vec<String>> = gold.iter().map(|g| g.labels.clone()).collect();
    let mut counts: Vec<(String, u64)> = Vec::new();
    let mut at: HashMap<&str, usize> = HashMap::new();
    for t in &texts {
        match at.get(t) {
            Some(&i) => counts[i].1 += 1,
            None => {
                at.insert(t, counts.len());
                counts.push((t.to_string(), 1));
            }
        }
    }
    let partition = partition_zipf(&counts, a.k);
    let labels = sim.label_vocabulary();
    let preds = nap_predictions(&m, &sim, &texts, exec).map_err(data)?;
    let mut nap = feedback_metrics(&texts, &preds, &golds, &partition, &labels).map_err(data)?;
    if let Some(h) = &a.heldout {
        nap.exact_rate = Some(exact_rate(&m, &sim, &dataset(h)?, exec).map_err(data)?);
    }
    let knn = match &a.dataset {
        Some(p) => {
            let ds = dataset(p)?;
            let index = KnnIndex::new(&ds).map_err(data)?;
            let preds = knn_predictions(&index, &sim, &texts, exec).map_err(data)?;
            Some(feedback_metrics(&texts, &preds, &golds, &partition, &labels).map_err(data)?)
        }
        None => None,
    };
    print_json(&json!({ "k": a.k, "solutions": texts.len(), "nap": nap, "knn": knn }))
}

fn serve(a: crate::ServeArgs) -> Res {
    let mut sources = BTreeMap::new();
    for p in &a.items {
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| data(format!("{}: no file name", p.display())))?;
        sources.insert(name.to_string(), solutions(p)?);
    }
    let assistant = match (&a.model, &a.grammar) {
        (Some(mp), Some(gp)) => {
            let sim = grammar(gp)?;
            Some(Assistant {
                model: model(mp, &sim)?,
                sim,
            })
        }
        _ => None,
    };
    let gold = match &a.gold {
        Some(p) => Some(
            read_gold(p)
                .map_err(data)?
                .into_iter()
                .map(|g| (g.text, g.labels))
                .collect(),
        ),
        None => None,
    };
    let cfg = Config {
        data_dir: a.data_dir.clone(),
        sources,
        assistant,
        gold,
    };
    let svc = Arc::new(Service::open(cfg, Arc::new(SystemClock)).map_err(data)?);
    let app = gengrade_service::router(svc, a.cors_origin.as_deref());
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await.map_err(data)?;
        let addr = listener.local_addr().map_err(internal)?;
        println!("listening on http://{addr}");
        io::stdout().flush().ok();
        gengrade_service::serve(listener, app).await.map_err(internal)
    })
}
