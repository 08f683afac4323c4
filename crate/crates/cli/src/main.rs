use clap::Parser;
use contiv_cli::{error_report, run, Cli, EXIT_FAILURE};

fn main() {
    let cli = Cli::parse();
    let result = cli.resolve().and_then(|cfg| {
        if cli.overrides.dump_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        let outcome = run(&cfg)?;
        for path in outcome.outputs.iter().chain(std::iter::once(&outcome.manifest)) {
            println!("{}", path.display());
        }
        Ok(())
    });
    if let Err(e) = result {
        eprintln!("{}", error_report(&e));
        std::process::exit(EXIT_FAILURE);
    }
}
