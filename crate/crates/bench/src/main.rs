use clap::Parser;

fn main() {
    let args = riskgrad_bench::cli::Cli::parse();
    if let Err(e) = riskgrad_bench::cli::run(&args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
