mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{value_parser, Arg, ArgMatches, Command};

use config::{FieldKind, RunConfig, FIELDS};

const COMMANDS: &[(&str, &str)] = &[
    (
        "synth",
        "Write synthetic train/ and test/ class trees plus a manifest under data_dir",
    ),
    (
        "train",
        "Meta-train (daml, maml) or pretrain the baseline encoder (finetune, knn)",
    ),
    (
        "eval",
        "Evaluate the trained model at every support size in k_sweep",
    ),
    ("ablate", "Train and evaluate over the eta x augmentation grid"),
    (
        "gradcheck",
        "Check every backward rule against finite differences",
    ),
];

const THREADS_VAR: &str = "METAFIT_THREADS";

fn cli() -> Command {
    let mut cmd = Command::new("metafit")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Difficulty-aware meta-learning for few-shot binary classification")
        .after_help(
            "Every field of the config file can be set with --<field>; flags win over the file.\n\
             METAFIT_THREADS caps the number of worker threads.\n\
             Exit status: 0 ok, 1 gradcheck failure, 2 config error, 3 data error, 4 numeric error.",
        )
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("TOML run configuration")
                .value_parser(value_parser!(PathBuf)),
        );
        for (section, key, kind) in FIELDS {
            let mut arg = Arg::new(*key)
                .long(*key)
                .help_heading(*section)
                .value_name("VALUE")
                .allow_negative_numbers(true);
            if *kind == FieldKind::Switch {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    FIELDS
        .iter()
        .filter_map(|(_, key, _)| m.get_one::<String>(key).map(|v| (key.to_string(), v.clone())))
        .collect()
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        metafit::Error::Config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting worker threads")
}

fn run(name: &str, m: &ArgMatches) -> Result<bool> {
    init_threads()?;
    let cfg = RunConfig::resolve(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        &overrides(m),
    )?;
    commands::write_echo(&cfg)?;
    match name {
        "synth" => commands::synth(&cfg)?,
        "train" => commands::train(&cfg)?,
        "eval" => commands::eval(&cfg)?,
        "ablate" => commands::ablate(&cfg)?,
        "gradcheck" => return commands::gradcheck(&cfg),
        other => unreachable!("unhandled command {other}"),
    }
    Ok(true)
}

fn exit_status(err: &anyhow::Error) -> u8 {
    use metafit::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Spec(_) | E::Usage(_) => 2,
                E::Numeric(_) | E::Domain { .. } => 4,
                E::Shape { .. }
                | E::Validation(_)
                | E::Protocol(_)
                | E::Metric(_)
                | E::Format { .. }
                | E::Io { .. } => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut previous = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !previous.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        previous = text;
    }
    out
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("metafit {name}: {}", describe(&e));
            ExitCode::from(exit_status(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn flags_become_overrides() {
        let m = cli()
            .try_get_matches_from([
                "metafit",
                "train",
                "--eta",
                "3",
                "--resume",
                "--second_order",
                "false",
            ])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let o = overrides(sub);
        assert!(o.contains(&("eta".into(), "3".into())));
        assert!(o.contains(&("resume".into(), "true".into())));
        assert!(o.contains(&("second_order".into(), "false".into())));
        assert_eq!(o.len(), 3);
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let code = |e: metafit::Error| exit_status(&anyhow::Error::from(e).context("outer"));
        assert_eq!(code(metafit::Error::Config("x".into())), 2);
        assert_eq!(code(metafit::Error::Protocol("x".into())), 3);
        assert_eq!(code(metafit::Error::Numeric("x".into())), 4);
    }
}
