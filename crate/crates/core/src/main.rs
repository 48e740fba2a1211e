use clap::Parser;

fn main() -> std::process::ExitCode {
    chunkwise::cli::main_with(chunkwise::cli::Cli::parse())
}
