use clap::{CommandFactory, Parser};
use oms_lab_cli::args::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = oms_lab_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(oms_lab_cli::exit_code(&e));
    }
}
