use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = blocksonar::cli::Cli::parse();
    match blocksonar::cli::run(cli) {
        Ok(manifest) => println!("wrote {}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(match e {
                blocksonar::cli::CliError::NoSeeds => 3,
                blocksonar::cli::CliError::MissingInputs(_) => 4,
                _ => 1,
            });
        }
    }
}
