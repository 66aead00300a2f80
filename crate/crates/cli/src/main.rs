use clap::Parser;

fn main() {
    let cli = vrwkv_cli::Cli::parse();
    std::process::exit(vrwkv_cli::run(&cli));
}
