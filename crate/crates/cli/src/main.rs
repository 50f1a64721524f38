use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command as Cli};
use dat_core::config::{read_config_file, ExperimentConfig, Kind, KEYS};
use dat_core::run::{self, Command};
use dat_core::DatError;

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 1;

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|k| {
            let mut help = k.help.to_string();
            if !k.default.is_empty() {
                help.push_str(&format!(" [default: {}]", k.default));
            }
            let arg = Arg::new(k.name).long(k.name).help(help).value_name("VALUE");
            match k.kind {
                // `--with-discretizer` alone means true; `--with-discretizer false` also works.
                Kind::Bool => arg.num_args(0..=1).default_missing_value("true"),
                _ => arg.num_args(1),
            }
        })
        .collect()
}

fn cli() -> Cli {
    let mut root = Cli::new("dat")
        .about("Discrete adversarial training experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for c in Command::ALL {
        root = root.subcommand(
            Cli::new(c.name())
                .about(c.about())
                .arg(
                    Arg::new("config")
                        .long("config")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("key=value file supplying defaults; flags override it"),
                )
                .arg(
                    Arg::new("force")
                        .long("force")
                        .action(ArgAction::SetTrue)
                        .help("replace an existing run directory"),
                )
                .args(key_args()),
        );
    }
    root
}

fn overrides(m: &ArgMatches) -> Result<BTreeMap<String, String>, DatError> {
    let mut map = match m.get_one::<PathBuf>("config") {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    for k in KEYS {
        if m.value_source(k.name) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(k.name) {
                map.insert(k.name.to_string(), v.clone());
            }
        }
    }
    Ok(map)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command: Command = name.parse().expect("registered subcommand");
    let force = sub.get_flag("force");

    let cfg = match overrides(sub).and_then(|m| ExperimentConfig::resolve(&m)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Err(e) = run::check(&cfg, command) {
        eprintln!("error: {e}");
        return ExitCode::from(CONFIG_ERROR);
    }
    let result = run::execute(&cfg, command, force, |rec| {
        let epoch = rec.epoch.map(|e| format!(" epoch {e}")).unwrap_or_default();
        let vals: Vec<String> = rec
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        eprintln!("[{}{epoch}] {}", rec.stage, vals.join(" "));
    });
    match result {
        Ok(out) => {
            println!("{}", out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ (DatError::Config(_) | DatError::RunExists(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
