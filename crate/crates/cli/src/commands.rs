// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use latsteer::direction_finder::{fit_directions as fit_layer, DIRECTIONS_FILE};
use latsteer::divergence::{read_jsonl, to_jsonl, triples_from_roles, triples_from_tagged};
use latsteer::steerer::default_layer_threshold;
use latsteer::synth::FamilyShape;
use latsteer::tensor_store::{layer_file_name, LABELS_FILE, MANIFEST_FILE};
use latsteer::{
    evaluate_probe, generate_dump, grid_search_strength, project, reduction_summary,
    separation_ratio, steer_batch, token_shift_table, train_probe, ActivationMatrix, DirectionSet,
    Dump, Error, KLReport, LayerDirections, NextTokenFamily, SteeringConfig, SynthSpec,
    TrainSettings,
};

use crate::output::{input_error, RunRecord};
use crate::{ClassifyArgs, EvalKlArgs, FitArgs, GridArgs, PlotArgs, SynthArgs};

pub const FAMILY_FILE: &str = "family.json";

fn open_dump(path: &Path, run: &mut RunRecord) -> Result<Dump> {
    if !path.is_dir() {
        return Err(input_error(format!("dump not found: {}", path.display())));
    }
    let dump = Dump::open(path)?;
    run.hash_file(&path.join(MANIFEST_FILE))?;
    run.hash_file(&path.join(LABELS_FILE))?;
    Ok(dump)
}

fn load_layer(dump: &Dump, layer: usize, run: &mut RunRecord) -> Result<ActivationMatrix> {
    let acts = dump.load_layer(layer)?;
    run.hash_file(&dump.root().join(layer_file_name(layer)))?;
    Ok(acts)
}

fn open_directions(path: &Path, dump: &Dump, run: &mut RunRecord) -> Result<DirectionSet> {
    if !path.join(DIRECTIONS_FILE).is_file() {
        return Err(input_error(format!(
            "directions not found: {}",
            path.display()
        )));
    }
    let dirs = DirectionSet::load(path)?;
    if dirs.manifest_sha256 != dump.manifest_sha256() {
        return Err(Error::HashMismatch {
            expected: dirs.manifest_sha256.clone(),
            found: dump.manifest_sha256().to_string(),
        })
        .context("directions were fit on a different dump; refit them");
    }
    run.hash_dir(path)?;
    Ok(dirs)
}

fn variance_rows(fits: &BTreeMap<usize, LayerDirections>, k: usize) -> Vec<Vec<String>> {
    fits.iter()
        .map(|(layer, fit)| {
            let mut row = vec![layer.to_string()];
            row.extend(
                fit.explained_variance_ratio
                    .iter()
                    .take(k)
                    .map(f64::to_string),
            );
            row.push(fit.total_variance.to_string());
            row
        })
        .collect()
}

fn write_variance_csv(run: &RunRecord, dirs: &DirectionSet) -> Result<()> {
    let k = dirs.k();
    let names: Vec<String> = (1..=k).map(|j| format!("pc{j}_ratio")).collect();
    let mut header = vec!["layer"];
    header.extend(names.iter().map(String::as_str));
    header.push("total_variance");
    run.write_csv("variance.csv", &header, &variance_rows(&dirs.layers, k))?;
    Ok(())
}

pub fn fit_directions(args: &FitArgs) -> Result<RunRecord> {
    let mut run = RunRecord::new(&args.out)?;
    let dump = open_dump(&args.dump, &mut run)?;
    let layers = (0..dump.manifest().layers)
        .map(|l| load_layer(&dump, l, &mut run))
        .collect::<Result<Vec<_>>>()?;
    let dirs = DirectionSet::fit(&layers, args.k, dump.manifest_sha256())?;
    dirs.save(&args.out)?;
    write_variance_csv(&run, &dirs)?;
    for (layer, fit) in &dirs.layers {
        log::info!(
            "layer {layer}: explained variance {:?}",
            fit.explained_variance_ratio
        );
    }
    println!("fitted {} layers, k = {}", dirs.layers.len(), args.k);
    Ok(run)
}

fn scatter_rows(acts: &ActivationMatrix, points: &[Vec<f64>]) -> Vec<Vec<String>> {
    points
        .iter()
        .zip(acts.labels())
        .enumerate()
        .map(|(i, (p, lang))| {
            let mut row = vec![i.to_string(), lang.clone()];
            row.extend(p.iter().map(f64::to_string));
            row
        })
        .collect()
}

pub fn plot_data(args: &PlotArgs) -> Result<RunRecord> {
    let mut run = RunRecord::new(&args.out)?;
    let dump = open_dump(&args.dump, &mut run)?;
    let dirs = open_directions(&args.directions, &dump, &mut run)?;
    let num_layers = dump.manifest().layers;
    let layers: Vec<usize> = if args.layers.is_empty() {
        dirs.layers.keys().copied().collect()
    } else {
        args.layers.clone()
    };
    let n = dirs.k().min(2);
    let header: Vec<String> = ["row", "language"]
        .into_iter()
        .map(String::from)
        .chain((1..=n).map(|j| format!("pc{j}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();

    let steering = args
        .strength
        .map(|strength| {
            let cfg = SteeringConfig {
                strength,
                layer_threshold: args
                    .layer_threshold
                    .unwrap_or_else(|| default_layer_threshold(num_layers)),
                component_index: 0,
            };
            cfg.validate(num_layers, dirs.k()).map(|()| cfg)
        })
        .transpose()?;

    let mut separation = Vec::new();
    for &layer in &layers {
        let fit = dirs.layer(layer)?;
        let acts = load_layer(&dump, layer, &mut run)?;
        let points = project(&acts, fit, n)?;
        run.write_csv(
            &format!("scatter_layer_{layer}.csv"),
            &header,
            &scatter_rows(&acts, &points),
        )?;
        let sep = separation_ratio(&points, acts.labels())?;
        let mut steered_sep = String::new();
        if let Some(cfg) = steering.as_ref().filter(|c| layer >= c.layer_threshold) {
            let steered = steer_batch(std::slice::from_ref(&acts), &dirs, cfg)?;
            let points = project(&steered[0], fit, n)?;
            run.write_csv(
                &format!("steered_scatter_layer_{layer}.csv"),
                &header,
                &scatter_rows(&steered[0], &points),
            )?;
            steered_sep = separation_ratio(&points, acts.labels())?.to_string();
        }
        separation.push(vec![layer.to_string(), sep.to_string(), steered_sep]);
    }
    run.write_csv(
        "separation.csv",
        &["layer", "separation", "steered_separation"],
        &separation,
    )?;
    write_variance_csv(&run, &dirs)?;
    println!("wrote scatter data for {} layers", layers.len());
    Ok(run)
}

#[derive(Serialize)]
struct PairAccuracy {
    language_pair: String,
    accuracy: f64,
    confusion: Vec<Vec<usize>>,
    languages: Vec<String>,
    fit_per_language: usize,
    val_per_language: usize,
}

pub fn classify(args: &ClassifyArgs) -> Result<RunRecord> {
    let mut run = RunRecord::new(&args.out)?;
    let dump = open_dump(&args.dump, &mut run)?;
    let manifest = dump.manifest().clone();
    let per = manifest.samples_per_language;
    if args.fit < 2 || args.val < 1 {
        return Err(input_error(
            "need at least 2 fit and 1 validation samples per language",
        ));
    }
    if args.fit + args.val > per {
        return Err(input_error(format!(
            "insufficient samples: split needs {} + {} per language, dump has {per}",
            args.fit, args.val
        )));
    }
    let ref_idx = manifest
        .languages
        .iter()
        .position(|l| *l == args.reference)
        .ok_or_else(|| {
            input_error(format!(
                "reference language {:?} not in dump",
                args.reference
            ))
        })?;
    let layer = args.layer.unwrap_or(manifest.layers - 1);
    let shared = args
        .directions
        .as_ref()
        .map(|d| open_directions(d, &dump, &mut run))
        .transpose()?;
    let acts = load_layer(&dump, layer, &mut run)?;

    let rows = |langs: [usize; 2], range: std::ops::Range<usize>| -> Vec<usize> {
        langs
            .iter()
            .flat_map(|&j| range.clone().map(move |i| j * per + i))
            .collect()
    };
    let mut results = Vec::new();
    for (j, lang) in manifest.languages.iter().enumerate() {
        if j == ref_idx {
            continue;
        }
        let pair = format!("{}-{lang}", args.reference);
        let fit_acts = acts.select_rows(&rows([ref_idx, j], 0..args.fit))?;
        let val_acts = acts.select_rows(&rows([ref_idx, j], args.fit..args.fit + args.val))?;
        let own;
        let dirs = match &shared {
            Some(set) => set.layer(layer)?,
            None => {
                own = fit_layer(&fit_acts, 1)?;
                &own
            }
        };
        let pc1 = |a: &ActivationMatrix| -> Result<Vec<f64>> {
            Ok(project(a, dirs, 1)?.into_iter().map(|r| r[0]).collect())
        };
        let mut probe = train_probe(
            &pc1(&fit_acts)?,
            fit_acts.labels(),
            &TrainSettings::default(),
        )
        .with_context(|| format!("training probe for {pair}"))?;
        probe.layer_index = layer;
        probe.component_index = 0;
        let eval = evaluate_probe(&probe, &pc1(&val_acts)?, val_acts.labels())?;
        run.write(&format!("probe_{pair}.json"), probe.to_json())?;
        println!("{pair}\t{:.2}", eval.accuracy);
        results.push(PairAccuracy {
            language_pair: pair,
            accuracy: eval.accuracy,
            confusion: eval.confusion,
            languages: eval.languages,
            fit_per_language: args.fit,
            val_per_language: args.val,
        });
    }
    let table: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.language_pair.clone(), r.accuracy.to_string()])
        .collect();
    run.write_csv("accuracy.csv", &["language_pair", "accuracy"], &table)?;
    run.write_json("accuracy.json", &results)?;
    Ok(run)
}

fn pair_vec(pair: &str) -> Vec<String> {
    if pair.is_empty() {
        Vec::new()
    } else {
        pair.split('-').map(String::from).collect()
    }
}

fn read_records(
    path: &Path,
    run: &mut RunRecord,
) -> Result<Vec<latsteer::divergence::DistributionRecord>> {
    let records = read_jsonl(path)?;
    run.hash_file(path)?;
    Ok(records)
}

pub fn evaluate_kl(args: &EvalKlArgs) -> Result<RunRecord> {
    let mut run = RunRecord::new(&args.out)?;
    let triples = match (&args.reference, &args.candidate) {
        (Some(reference), Some(candidate)) => {
            let reference = read_records(reference, &mut run)?;
            let candidate = read_records(candidate, &mut run)?;
            let steered = args
                .steered
                .as_ref()
                .map(|p| read_records(p, &mut run))
                .transpose()?;
            triples_from_roles(&reference, &candidate, steered.as_deref())?
        }
        _ => {
            if args.dists.is_empty() {
                return Err(input_error("pass --dists, or --reference with --candidate"));
            }
            let mut records = Vec::new();
            for path in &args.dists {
                records.extend(read_records(path, &mut run)?);
            }
            triples_from_tagged(&records)?
        }
    };
    let report = KLReport::compute(&triples, args.top_k, pair_vec(&args.pair), args.strength)?;
    run.write_json("kl_report.json", &report)?;
    run.write("kl_report.csv", report.to_csv())?;
    let row = report.summary_row();
    run.write(
        "summary.tsv",
        format!("language_pair\tkl_divergence\n{row}\n"),
    )?;
    if report.mean_steered.is_some() {
        run.write_json(
            "reduction.json",
            &reduction_summary(std::slice::from_ref(&report))?,
        )?;
        let first = &triples[0];
        let steered = first
            .steered
            .as_ref()
            .expect("steered present for all samples");
        let n = args
            .shift_rows
            .min(first.reference.k())
            .min(first.unsteered.k())
            .min(steered.k());
        if n > 0 {
            let table = token_shift_table(&first.reference, &first.unsteered, steered, n)?;
            run.write("token_shift.csv", table.to_csv())?;
        }
    }
    println!("{row}");
    Ok(run)
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct FamilyMeta {
    language_pair: String,
    s_star: f64,
    seed: u64,
    shape: FamilyShape,
}

pub fn strength_file_name(s: f64) -> String {
    format!("strength_{s}.jsonl")
}

fn strength_files(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(s) = name
            .strip_prefix("strength_")
            .and_then(|r| r.strip_suffix(".jsonl"))
            .and_then(|r| r.parse::<f64>().ok())
        else {
            continue;
        };
        out.push((s, path));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[derive(Serialize)]
struct GridOutcome {
    language_pair: String,
    best_strength: f64,
    best_mean_kl: f64,
    mean_unsteered: f64,
    reduction: f64,
    zero_baseline: bool,
    top_k: usize,
}

pub fn grid_search(args: &GridArgs) -> Result<RunRecord> {
    let mut run = RunRecord::new(&args.out)?;
    if !args.family.is_dir() {
        return Err(input_error(format!(
            "family dir not found: {}",
            args.family.display()
        )));
    }
    let meta_path = args.family.join(FAMILY_FILE);
    let recorded_pair = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path)?;
        let meta: FamilyMeta = serde_json::from_str(&text)
            .map_err(|e| input_error(format!("{}: {e}", meta_path.display())))?;
        run.hash_file(&meta_path)?;
        Some(meta.language_pair)
    } else {
        None
    };
    let pair = args.pair.clone().or(recorded_pair).unwrap_or_default();
    let files = strength_files(&args.family)?;

    let mut reports = Vec::new();
    for s in args.grid.points() {
        let (_, path) = files
            .iter()
            .find(|(fs, _)| (fs - s).abs() <= 1e-6)
            .ok_or_else(|| input_error(format!("no {} in family dir", strength_file_name(s))))?;
        let records = read_records(path, &mut run)?;
        let triples = triples_from_tagged(&records)?;
        if triples.iter().any(|t| t.steered.is_none()) {
            return Err(input_error(format!(
                "{} has no steered records",
                path.display()
            )));
        }
        let report = KLReport::compute(&triples, args.top_k, pair_vec(&pair), Some(s))?;
        log::debug!("strength {s}: mean KL {:?}", report.mean_steered);
        reports.push(report);
    }
    let mut lookup = reports.iter();
    let result = grid_search_strength(&args.grid, |_| {
        lookup
            .next()
            .and_then(|r| r.mean_steered)
            .ok_or("missing report")
    })?;
    let best = reports
        .iter()
        .find(|r| r.strength == Some(result.best_strength))
        .expect("best strength comes from the grid");
    let summary = reduction_summary(std::slice::from_ref(best))?;
    let reduction = &summary.pairs[0];

    run.write("grid_curve.csv", result.curve_csv())?;
    run.write_json("kl_report.json", best)?;
    let label = if pair.is_empty() {
        "-".to_string()
    } else {
        pair.clone()
    };
    let line = format!("{label}\t{}", result.best_strength);
    run.write(
        "best_strength.tsv",
        format!("language_pair\tbest_strength\n{line}\n"),
    )?;
    run.write_json(
        "grid_result.json",
        &GridOutcome {
            language_pair: pair,
            best_strength: result.best_strength,
            best_mean_kl: result.best_score,
            mean_unsteered: best.mean_unsteered,
            reduction: reduction.reduction,
            zero_baseline: reduction.zero_baseline,
            top_k: args.top_k,
        },
    )?;
    println!("{line}");
    Ok(run)
}

pub fn synth(args: &SynthArgs) -> Result<RunRecord> {
    let run = RunRecord::new(&args.out)?;
    let spec = SynthSpec {
        dim: args.dim,
        layers: args.layers,
        crit_layer: args.crit_layer,
        ..SynthSpec::with_seed(args.seed)
    };
    if args.family {
        let s_star = args.s_star.expect("clap enforces --s-star with --family");
        let shape = FamilyShape {
            vocab: args.vocab,
            top_k: args.top_k,
            samples: args.samples,
        };
        let family = NextTokenFamily::with_shape(&spec, s_star, shape)?;
        let points = args.grid.points();
        for &s in &points {
            run.write(&strength_file_name(s), to_jsonl(&family.records(s)))?;
        }
        run.write_json(
            FAMILY_FILE,
            &FamilyMeta {
                language_pair: "en-synth".into(),
                s_star,
                seed: args.seed,
                shape,
            },
        )?;
        println!(
            "wrote {} strength files, planted s* = {s_star}",
            points.len()
        );
    } else {
        let dump = generate_dump(&spec, args.n)?;
        dump.write(&args.out)?;
        println!(
            "wrote {} layers of {} x {} activations",
            spec.layers,
            dump.manifest.total_rows(),
            spec.dim
        );
    }
    Ok(run)
}
