use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use helpz::attnselect::select_best;
use helpz::baselines::{generate, HeadSource, SynthConfig};
use helpz::data::make_splits_with_train;
use helpz::justifier::{accuracy, annotate_error_maps, train, TrainConfig};
use helpz::metrics::{self, HelpReport};
use helpz::usersim::{self, Population, SimUser, ValidationConfig};
use helpz::{io, Dataset, Execution, Mode, Record};

use crate::{
    CliError, CliResult, Command, DataArgs, ErrorMapArgs, EvalArgs, HeadsArg, IngestArgs, ModeArg,
    SelectArgs, SimulateArgs, SplitArg, SynthArgs, TrainArgs,
};

pub(crate) fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Ingest(a) => ingest(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Select(a) => select(a, out),
        Command::TrainJustifier(a) => train_justifier(a, out),
        Command::GenErrormaps(a) => gen_errormaps(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Simulate(a) => simulate(a, out),
    }
}

fn load(input: &DataArgs) -> CliResult<Dataset> {
    Ok(io::read_records(&input.data, input.stacks.as_deref())?)
}

fn in_split(ds: &Dataset, split: SplitArg) -> Vec<&Record> {
    ds.records()
        .iter()
        .filter(|r| split.split().is_none_or(|s| r.split == s))
        .collect()
}

/// `report.json` -> `report.csv`.
fn csv_twin(path: &Path) -> PathBuf {
    let twin = path.with_extension("csv");
    if twin == path {
        path.with_extension("table.csv")
    } else {
        twin
    }
}

/// Violation message with its numbers masked, used to group counts.
fn violation_kind(message: &str) -> String {
    let mut out = String::with_capacity(message.len());
    let mut in_number = false;
    for ch in message.chars() {
        if ch.is_ascii_digit() {
            if !in_number {
                out.push('#');
            }
            in_number = true;
        } else {
            in_number = false;
            out.push(ch);
        }
    }
    out
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load(&a.input)?;
    let violations = ds.validate();
    let invalid: BTreeSet<usize> = violations.iter().map(|(i, _)| *i).collect();
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for (_, v) in &violations {
        *kinds.entry(violation_kind(v)).or_default() += 1;
    }
    let constant = ds
        .records()
        .iter()
        .filter(|r| !r.constant_maps().is_empty())
        .count();
    let n = ds.len();
    writeln!(out, "records: {n}")?;
    writeln!(out, "valid: {}", n - invalid.len())?;
    writeln!(out, "invalid: {}", invalid.len())?;
    writeln!(out, "with constant maps: {constant}")?;
    for (k, c) in &kinds {
        writeln!(out, "  {c:>6}  {k}")?;
    }
    for (i, v) in violations.iter().take(20) {
        writeln!(out, "record {} ({}): {v}", i, ds.records()[*i].id)?;
    }
    if !invalid.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} of {n} records are invalid",
            invalid.len()
        )));
    }
    if let Some(path) = &a.out {
        io::write_records(path, &ds)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: &'a str,
    reports: &'a [HelpReport],
}

fn has_maps(r: &Record, mode: Mode) -> bool {
    match mode {
        Mode::Attention => r.attention_map.is_some(),
        Mode::Error => r.error_map.is_some(),
        Mode::Joint => r.attention_map.is_some() && r.error_map.is_some(),
    }
}

fn split_name(split: SplitArg) -> &'static str {
    split.split().map_or("all", |s| s.as_str())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load(&a.input)?;
    let records = in_split(&ds, a.split);
    let modes: Vec<Mode> = match a.mode {
        ModeArg::Attention => vec![Mode::Attention],
        ModeArg::Error => vec![Mode::Error],
        ModeArg::Joint => vec![Mode::Joint],
        ModeArg::All => Mode::ALL
            .into_iter()
            .filter(|&m| !records.is_empty() && records.iter().all(|r| has_maps(r, m)))
            .collect(),
    };
    if modes.is_empty() {
        return Err(CliError::Invalid(format!(
            "no explanation mode has its maps on every {} record",
            split_name(a.split)
        )));
    }
    let reports = modes
        .iter()
        .map(|&m| metrics::help(records.iter().copied(), m, a.variance))
        .collect::<helpz::Result<Vec<_>>>()?;

    writeln!(
        out,
        "{:<10} {:>12} {:>12} {:>9} {:>10} {:>9} {:>7} {:>8}",
        "mode", "rel_correct", "rel_wrong", "help_z", "p_value", "n_correct", "n_wrong", "excluded"
    )?;
    for r in &reports {
        writeln!(
            out,
            "{:<10} {:>12.4} {:>12.4} {:>9.3} {:>10.3e} {:>9} {:>7} {:>8}",
            r.mode.as_str(),
            r.mean_rel_correct,
            r.mean_rel_wrong,
            r.help_z,
            r.p_value,
            r.n_correct,
            r.n_wrong,
            r.excluded_degenerate
        )?;
    }
    if let Some(path) = &a.report {
        io::write_json(
            path,
            &EvalReport {
                split: split_name(a.split),
                reports: &reports,
            },
        )?;
        io::write_csv(&csv_twin(path), &reports)?;
    }
    Ok(())
}

fn select(a: SelectArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut ds = load(&a.input)?;
    let result = select_best(&mut ds, a.strategy, a.val_split)?;
    let part = |v: Option<usize>| v.map_or("*".to_string(), |x| x.to_string());
    writeln!(out, "strategy: {}", result.strategy)?;
    writeln!(
        out,
        "chosen: layer {} head {}",
        part(result.chosen_layer),
        part(result.chosen_head)
    )?;
    writeln!(out, "{} help_z: {:.4}", result.split, result.val_help_z)?;
    writeln!(
        out,
        "candidates scored: {}, skipped: {}",
        result.per_candidate_scores.len(),
        result.skipped.len()
    )?;
    io::write_records(&a.out, &ds)?;
    if let Some(path) = &a.report {
        io::write_json(path, &result)?;
        io::write_csv(&csv_twin(path), &result.per_candidate_scores)?;
    }
    Ok(())
}

fn train_justifier(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load(&a.input)?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        lambda_att: a.lambda_att,
        seed: a.seed,
        hidden: a.hidden,
        conv_channels: a.conv_channels,
    };
    let outcome = train(&ds, &config)?;
    let first = outcome.trace.first().expect("trace has the initial loss");
    let last = outcome.trace.last().expect("trace has the final loss");
    writeln!(out, "loss: {:.6} -> {:.6}", first.total, last.total)?;
    writeln!(
        out,
        "train accuracy: {:.4}",
        accuracy(&outcome.params, &ds.split(helpz::Split::Train))?
    )?;
    let val = ds.split(helpz::Split::Val);
    if !val.is_empty() {
        writeln!(out, "val accuracy: {:.4}", accuracy(&outcome.params, &val)?)?;
    }
    io::write_params(&a.out, &outcome.params)?;
    if let Some(path) = &a.trace {
        io::write_csv(path, &outcome.trace)?;
    }
    Ok(())
}

fn gen_errormaps(a: ErrorMapArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load(&a.input)?;
    let params = io::read_params(&a.params)?;
    let annotated = annotate_error_maps(
        &params,
        &ds,
        a.split.split(),
        a.variant,
        Execution::default(),
    )?;
    let n = in_split(&annotated, a.split).len();
    let degenerate = in_split(&annotated, a.split)
        .iter()
        .filter(|r| r.error_map.as_ref().is_some_and(|m| m.is_constant()))
        .count();
    writeln!(out, "error maps written: {n} ({degenerate} all-zero)")?;
    io::write_records(&a.out, &annotated)?;
    Ok(())
}

fn parse_planted(s: &str) -> CliResult<(usize, usize)> {
    s.split_once('.')
        .and_then(|(l, h)| Some((l.parse().ok()?, h.parse().ok()?)))
        .ok_or_else(|| CliError::Usage(format!("--planted expects \"layer.head\", got {s:?}")))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let planted = parse_planted(&a.planted)?;
    let head_source = match a.heads {
        HeadsArg::None => HeadSource::None,
        HeadsArg::Maps => HeadSource::PerHeadMaps {
            layers: a.layers,
            heads: a.heads_per_layer,
            planted,
        },
        HeadsArg::Stack => HeadSource::Stack {
            layers: a.layers,
            heads: a.heads_per_layer,
            tokens: a.tokens,
            planted,
        },
    };
    let config = SynthConfig {
        n_records: a.n,
        grid_channels: a.channels,
        p_correct: a.p_correct,
        attention_signal: a.signal,
        error_signal: a.error_signal,
        noise_sigma: a.noise,
        seed: a.seed,
        flip_fraction: a.flip,
        human_layout: a.human_layout,
        head_source,
        ..SynthConfig::default()
    };
    let ds = make_splits_with_train(generate(&config)?, a.train_fraction, a.val_fraction, a.seed)?;
    let idx = ds.split_index();
    let count = |s| idx.get(&s).map_or(0, Vec::len);
    writeln!(
        out,
        "records: {} (train {}, val {}, test {})",
        ds.len(),
        count(helpz::Split::Train),
        count(helpz::Split::Val),
        count(helpz::Split::Test)
    )?;
    io::write_records(&a.out, &ds)?;
    Ok(())
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load(&a.input)?;
    let records = in_split(&ds, a.split);
    let mut user = SimUser::with_median_thresholds(&records, a.mode, a.epsilon, a.seed)?;
    if let Some(t) = a.user_tau {
        user.tau_att = t;
    }
    if let Some(t) = a.user_tau_err {
        user.tau_err = t;
    }
    let config = ValidationConfig {
        n_subsets: a.subsets,
        subset_size: a.subset_size,
        n_bins: a.bins,
        mix_range: (a.mix_min, a.mix_max),
        seed: a.seed,
    };
    let curve = usersim::validate_metric(&records, &user, a.mode, &config)?;
    writeln!(out, "mode: {}", curve.mode)?;
    writeln!(
        out,
        "tau_att: {:.4}  tau_err: {:.4}  epsilon: {}",
        user.tau_att, user.tau_err, user.epsilon
    )?;
    writeln!(out, "pearson_r: {:.4}", curve.pearson_r)?;
    writeln!(out, "spearman_rho: {:.4}", curve.spearman_rho)?;
    if curve.degenerate {
        writeln!(
            out,
            "warning: fewer than 3 subsets, correlations are degenerate"
        )?;
    }
    writeln!(
        out,
        "{:>12} {:>14} {:>4}",
        "bin_center", "mean_accuracy", "n"
    )?;
    for b in &curve.bins {
        writeln!(
            out,
            "{:>12.3} {:>14.4} {:>4}",
            b.bin_center, b.mean_accuracy, b.n
        )?;
    }
    if let Some(path) = &a.report {
        io::write_json(path, &curve)?;
        io::write_csv(&csv_twin(path), &curve.bins)?;
    }
    if let Some(path) = &a.points {
        io::write_csv(path, &curve.points)?;
    }
    if let Some(path) = &a.relevance_curve {
        let population = Population {
            seed: a.seed,
            ..Population::default()
        };
        let points = usersim::relevance_correctness_curve(&records, a.bins, &population)?;
        io::write_csv(path, &points)?;
    }
    Ok(())
}
