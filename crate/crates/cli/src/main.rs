use clap::Parser;

fn main() {
    let cli = mssde_cli::Cli::parse();
    if let Err(e) = mssde_cli::run(&cli) {
        eprintln!("mssde {}: {e}", cli.command.name());
        std::process::exit(e.exit_code());
    }
}
